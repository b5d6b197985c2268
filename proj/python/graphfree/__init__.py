"""Graph-free transformer for molecular energies and forces."""

from ._core import (
    Codebook,
    Frame,
    Model,
    __version__,
    cli,
    effective_radius,
    fit_joint_scaling,
    fit_power_law,
    generate_lj_dataset,
    h_of_r,
    isoflop,
    lennard_jones,
    parse_xyz,
    read_xyz,
    run_md,
    to_xyz,
    write_xyz,
)

__all__ = [
    "Codebook",
    "Frame",
    "Model",
    "__version__",
    "cli",
    "effective_radius",
    "fit_joint_scaling",
    "fit_power_law",
    "generate_lj_dataset",
    "h_of_r",
    "isoflop",
    "lennard_jones",
    "parse_xyz",
    "read_xyz",
    "run_md",
    "to_xyz",
    "write_xyz",
]
