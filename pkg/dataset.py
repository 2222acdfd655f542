# Dataset model - species metadata, reaction manifest and the loaded grids
# A dataset is a manifest plus one grid per species, in manifest order

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from catalog import ATOMIC_NUMBERS
from energy import ReactionRecord
from errors import DataError
from grid_core import MolecularGrid


class SpeciesMeta(BaseModel):
    """Elemental composition of a species and where its grid file lives."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    species_id: str
    composition: Dict[str, int]
    grid_file: Optional[str] = None

    @field_validator("composition")
    @classmethod
    def _known_elements(cls, composition):
        for element, count in composition.items():
            if element not in ATOMIC_NUMBERS:
                raise ValueError(f"unknown element '{element}'")
            if count <= 0:
                raise ValueError(f"atom count for '{element}' must be positive")
        return composition

    @property
    def atom_count(self) -> int:
        return sum(self.composition.values())

    @property
    def elements(self) -> List[str]:
        return sorted(self.composition)

    @property
    def single_element(self) -> bool:
        return len(self.composition) == 1


@dataclass
class Manifest:
    species: Dict[str, SpeciesMeta]
    reactions: List[ReactionRecord]
    metadata: Dict = field(default_factory=dict)

    def reaction(self, reaction_id: str) -> ReactionRecord:
        for record in self.reactions:
            if record.reaction_id == reaction_id:
                return record
        raise DataError(f"Unknown reaction '{reaction_id}'", reaction_id=reaction_id)

    def select(self, reaction_ids: Sequence[str]) -> List[ReactionRecord]:
        by_id = {r.reaction_id: r for r in self.reactions}
        missing = [rid for rid in reaction_ids if rid not in by_id]
        if missing:
            raise DataError(f"Unknown reaction '{missing[0]}'", reaction_id=missing[0])
        return [by_id[rid] for rid in reaction_ids]

    def check_species(self) -> None:
        """Every species a reaction names must have metadata."""
        for record in self.reactions:
            for species_id in record.species_ids():
                if species_id not in self.species:
                    raise DataError(
                        f"Reaction '{record.reaction_id}' references unknown species '{species_id}'",
                        species_id=species_id,
                        reaction_id=record.reaction_id,
                    )


@dataclass
class Dataset:
    manifest: Manifest
    grids: Dict[str, MolecularGrid]
    # per-point (a1, a2, a3) DM21-form factors, one (n_points, 3) array per species
    dm21_factors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.manifest.check_species()
        for record in self.manifest.reactions:
            for species_id in record.species_ids():
                if species_id not in self.grids:
                    raise DataError(
                        f"Reaction '{record.reaction_id}' needs a grid for species '{species_id}'",
                        species_id=species_id,
                        reaction_id=record.reaction_id,
                    )
        for species_id, factors in self.dm21_factors.items():
            grid = self.grids.get(species_id)
            if grid is None:
                raise DataError(f"DM21 factors given for unknown species '{species_id}'", species_id=species_id)
            if np.shape(factors) != (grid.n_points, 3):
                raise DataError(
                    f"DM21 factors for '{species_id}' must have shape ({grid.n_points}, 3), got {np.shape(factors)}",
                    species_id=species_id,
                )

    @property
    def reactions(self) -> List[ReactionRecord]:
        return self.manifest.reactions

    def species_for(self, reactions: Sequence[ReactionRecord]) -> List[str]:
        """Unique species of these reactions, in first-appearance order."""
        ordered: List[str] = []
        seen = set()
        for record in reactions:
            for species_id in record.species_ids():
                if species_id not in seen:
                    seen.add(species_id)
                    ordered.append(species_id)
        return ordered
