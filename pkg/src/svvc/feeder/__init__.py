"""Feeder data model, file readers and admittance assembly."""

from svvc.feeder.admittance import AdmittanceView, build_admittance
from svvc.feeder.io import apply_overlay, load_feeder, model_from_dict
from svvc.feeder.model import (
    PHASES, Branch, Bus, FeederError, FeederModel, InverterSite, Load, Shunt,
)
from svvc.feeder.profiles import ProfileError, ProfileSet, load_profiles

__all__ = [
    "AdmittanceView", "Branch", "Bus", "FeederError", "FeederModel", "InverterSite", "Load",
    "PHASES", "ProfileError", "ProfileSet", "Shunt", "apply_overlay", "build_admittance",
    "load_feeder", "load_profiles", "model_from_dict",
]
