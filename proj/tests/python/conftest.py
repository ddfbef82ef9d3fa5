import pathlib
import sys

# Fall back to the in-tree extension when the package is not installed.
try:
    import cityloc  # noqa: F401
except ImportError:
    sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[2] / "python"))
