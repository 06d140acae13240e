from __future__ import annotations

import importlib
import platform
from typing import Dict, Tuple

PACKAGES = ("numpy", "scipy", "matplotlib", "typer", "yaml")


def _module_version(name: str) -> Tuple[bool, str]:
    try:
        module = importlib.import_module(name)
    except Exception as exc:  # noqa: BLE001
        return False, str(exc)
    return True, str(getattr(module, "__version__", ""))


def diagnose_environment() -> Dict[str, Dict[str, str]]:
    results: Dict[str, Dict[str, str]] = {
        "python": {
            "present": "True",
            "version": platform.python_version(),
            "implementation": platform.python_implementation(),
        }
    }
    for name in PACKAGES:
        ok, info = _module_version(name)
        results[name] = {
            "present": str(ok),
            "version": info if ok else "",
            "error": "" if ok else info,
        }

    # sparse LU backs the cell and local solves
    try:
        from scipy.sparse.linalg import splu  # noqa: F401

        results["scipy"]["splu"] = "True"
    except Exception:  # noqa: BLE001
        if "scipy" in results:
            results["scipy"]["splu"] = "False"
    return results
