"""Access to the skeleton, pairing and limits configs shipped with the package."""

from pathlib import Path

from .skeleton import load_skeleton

CONFIG_DIR = Path(__file__).parent / "configs"
BUILTIN_SKELETONS = ("toy-human", "toy-robot", "g1-like")


def config_path(filename: str) -> Path:
    return CONFIG_DIR / filename


def builtin_skeleton(name: str):
    if name not in BUILTIN_SKELETONS:
        raise KeyError(f"no built-in skeleton {name!r}; have {BUILTIN_SKELETONS}")
    return load_skeleton(CONFIG_DIR / f"{name}.json")


def resolve_skeleton(name_or_path: str):
    """Load a skeleton from a file path, or by built-in name."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        return load_skeleton(p)
    return builtin_skeleton(name_or_path)
