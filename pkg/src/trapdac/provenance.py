"""Reproducibility stamps for generated artifacts.

Every artifact starts with tool version, a digest of the fully resolved
run configuration, and the seed. No timestamps: identical config and
seed must produce byte-identical files.
"""

import hashlib
import json

from . import __version__

TOOL = "trapdac"


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"),
                      default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def header_lines(config: dict, seed=None) -> list:
    return [
        f"tool {TOOL} {__version__}",
        f"config {config_digest(config)}",
        f"seed {'none' if seed is None else int(seed)}",
    ]


def comment_header(config: dict, seed=None, prefix: str = "# ") -> str:
    """Header block for CSV and text artifacts."""
    return "".join(prefix + line + "\n" for line in header_lines(config, seed))


def provenance_dict(config: dict, seed=None) -> dict:
    """Header object for JSON artifacts (placed as the first key)."""
    return {
        "tool": TOOL,
        "version": __version__,
        "config_digest": config_digest(config),
        "seed": None if seed is None else int(seed),
    }
