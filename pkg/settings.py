# Runtime settings
# Environment-driven defaults, loaded once from .env

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Default output root for every command that writes files
DEFAULT_OUTPUT_ROOT = os.getenv("RBNET_OUTPUT_ROOT", "runs")

# Species-level thread pool width when a caller does not pass one (--workers on the CLI)
MAX_WORKERS = 4

_output_root: Path = None


def get_output_root() -> Path:
    """Get the default output root, resolving it once."""
    global _output_root
    if _output_root is None:
        _output_root = Path(DEFAULT_OUTPUT_ROOT)
    return _output_root
