"""Few-shot texture generation with cross-attention feature blending."""

import sys

from ._xmgan import (
    ConfigError,
    ContractError,
    DimensionError,
    ParseError,
    cli,
    cli_captured,
    default_config,
    fid_lite,
    generate,
    gradcheck,
    lpips_lite,
    make_dataset,
    seen_classes,
    train,
    unseen_classes,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "ParseError",
    "cli",
    "cli_captured",
    "default_config",
    "fid_lite",
    "generate",
    "gradcheck",
    "lpips_lite",
    "make_dataset",
    "seen_classes",
    "train",
    "unseen_classes",
]


def main() -> int:
    """Console entry point mirroring the native xmgan executable."""
    return cli(sys.argv[1:])
