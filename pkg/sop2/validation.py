from pathlib import Path
from typing import List, Tuple

SWEEP_PARAMS = {"M": "pool_size", "n_P": "prompt_length", "K": "top_k", "fraction": "fraction"}
DOMAINS = ("source", "target")


class InputValidator:
    """Checks on command-line inputs; every check returns (ok, message)"""

    @staticmethod
    def validate_fraction(fraction: float) -> Tuple[bool, str]:
        if not 0.0 < fraction <= 1.0:
            return False, f"--fraction must be in (0, 1], got {fraction}"
        return True, ""

    @staticmethod
    def validate_scene_count(count: int) -> Tuple[bool, str]:
        if count < 1:
            return False, f"--scenes must be at least 1, got {count}"
        return True, ""

    @staticmethod
    def validate_domain(domain: str) -> Tuple[bool, str]:
        if domain not in DOMAINS:
            return False, f"--domain must be one of {', '.join(DOMAINS)}"
        return True, ""

    @staticmethod
    def validate_sweep_param(param: str) -> Tuple[bool, str]:
        if param not in SWEEP_PARAMS:
            return False, f"--param must be one of {', '.join(SWEEP_PARAMS)}"
        return True, ""

    @staticmethod
    def parse_values(text: str, integral: bool) -> Tuple[bool, str, List[float]]:
        """Parse a comma-separated value list such as ``20,30,40``"""
        items = [item.strip() for item in text.split(",") if item.strip()]
        if not items:
            return False, "--values needs at least one value", []
        values: List[float] = []
        for item in items:
            try:
                value = float(item)
            except ValueError:
                return False, f"--values: {item!r} is not a number", []
            if integral and (value != int(value) or value < 1):
                return False, f"--values: {item!r} must be a positive integer", []
            values.append(value)
        if len(set(values)) != len(values):
            return False, "--values repeats a value", []
        return True, "", values

    @staticmethod
    def validate_output_path(path: str, force: bool) -> Tuple[bool, str]:
        """Refuse to overwrite an existing file unless forced"""
        target = Path(path)
        if target.exists() and not force:
            return False, f"{path} exists; pass --force to overwrite"
        if target.exists() and target.is_dir():
            return False, f"{path} is a directory"
        return True, ""
