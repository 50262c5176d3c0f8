from __future__ import annotations

import importlib
import platform
import sys
from dataclasses import dataclass


@dataclass(slots=True)
class DoctorCheck:
    name: str
    status: str
    details: str


def _check_module(module_name: str, required: bool) -> DoctorCheck:
    try:
        module = importlib.import_module(module_name)
    except ModuleNotFoundError:
        state = "fail" if required else "warn"
        return DoctorCheck(module_name, state, "not installed")
    version = getattr(module, "__version__", "installed")
    return DoctorCheck(module_name, "ok", str(version))


def _check_highs() -> DoctorCheck:
    try:
        from scipy.optimize import linprog
    except ImportError as exc:
        return DoctorCheck("highs", "fail", f"scipy.optimize unavailable: {exc}")
    result = linprog(
        c=[-1.0, -1.0], A_ub=[[1.0, 1.0]], b_ub=[1.0], bounds=[(0, 1)] * 2, method="highs-ds"
    )
    if not result.success:
        return DoctorCheck("highs", "fail", f"dual simplex failed: {result.message}")
    return DoctorCheck("highs", "ok", f"dual simplex objective {-result.fun:g}")


def _check_schemas() -> DoctorCheck:
    from flowtrack.exporter import load_schema

    names = ("run_config", "trajectories", "rbf_model")
    try:
        for name in names:
            load_schema(name)
    except (OSError, ValueError) as exc:
        return DoctorCheck("schemas", "fail", str(exc))
    return DoctorCheck("schemas", "ok", ", ".join(names))


def run_doctor() -> tuple[list[DoctorCheck], bool]:
    checks: list[DoctorCheck] = [
        DoctorCheck(
            "python",
            "ok" if sys.version_info >= (3, 11) else "fail",
            f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}",
        ),
        DoctorCheck("platform", "ok", f"{platform.system()} {platform.release()}"),
        _check_module("numpy", required=True),
        _check_module("scipy", required=True),
        _check_module("jsonschema", required=True),
    ]
    if all(check.status == "ok" for check in checks):
        checks.append(_check_highs())
        checks.append(_check_schemas())
    healthy = all(check.status != "fail" for check in checks)
    return checks, healthy
