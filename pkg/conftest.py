import sys
from pathlib import Path

# Let pytest run from a fresh checkout (pure NumPy backend) without an install.
try:
    import memadapt  # noqa: F401
except ImportError:
    sys.path.insert(0, str(Path(__file__).parent / "src"))
