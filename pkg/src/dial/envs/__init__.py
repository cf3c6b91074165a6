from __future__ import annotations

from .base import Environment, StepResult, TaskSpec, budget_from_horizon
from .basic_nav import BasicNav
from .cartpole import CartPole
from .intersection import ControlState, IntersectionLite, linear_controller_act
from .mountain_car import MountainCar

REGISTRY = {
    "mountain_car": MountainCar,
    "cartpole": CartPole,
    "basic_nav": BasicNav,
    "intersection": IntersectionLite,
}


def make_env(name: str, overrides: dict | None = None) -> Environment:
    if name not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise ValueError(f"unknown env '{name}' (known: {known})")
    return REGISTRY[name](overrides)


__all__ = [
    "BasicNav", "CartPole", "ControlState", "Environment", "IntersectionLite",
    "MountainCar", "StepResult", "TaskSpec", "budget_from_horizon",
    "linear_controller_act", "make_env",
]
