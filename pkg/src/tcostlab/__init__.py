"""Utility maximization under proportional transaction costs on finite trees."""
from .cps import CpsBand, CpsSystem, extract_cps, propagate_bands, verify_martingale
from .dp import DpSolution, GridSpec, GridTooCoarse, extract_shadow_price, extract_strategy, solve
from .market import FbmSpec, GbmSpec, ScenarioTree, build_binomial, build_fbm_tree, build_random_tree
from .mz import MzPath, coupled_mz_distance, d_mz
from .utility import UtilitySpec
from .wealth import FrictionParams, GridStrategy, liquidation_value

__version__ = "0.1.0"

__all__ = [
    "CpsBand",
    "CpsSystem",
    "DpSolution",
    "FbmSpec",
    "FrictionParams",
    "GbmSpec",
    "GridSpec",
    "GridStrategy",
    "GridTooCoarse",
    "MzPath",
    "ScenarioTree",
    "UtilitySpec",
    "build_binomial",
    "build_fbm_tree",
    "build_random_tree",
    "coupled_mz_distance",
    "d_mz",
    "extract_cps",
    "extract_shadow_price",
    "extract_strategy",
    "liquidation_value",
    "propagate_bands",
    "solve",
    "verify_martingale",
]
