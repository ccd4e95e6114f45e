"""Synthetic design factory: generation, rewrites, layout emulation, workloads, power oracle."""
from .generate import GenParams, InfeasibleParams, gen_comb_block, gen_design
from .oracle import GROUPS, GroupPower, cell_power_model, group_power_trace, labels_csv, power_oracle
from .transforms import (LayoutParams, clock_tree_size, equiv_transform, layout_transform,
                         structurally_equal)
from .workload import gen_workload

__all__ = ["GenParams", "InfeasibleParams", "gen_comb_block", "gen_design", "GROUPS", "GroupPower",
           "cell_power_model", "group_power_trace", "labels_csv", "power_oracle", "LayoutParams",
           "clock_tree_size", "equiv_transform", "layout_transform", "structurally_equal",
           "gen_workload"]
