"""Run configuration: every tunable in one place, each tagged with its
provenance ("paper" for values stated in the method being reproduced, "repo"
for choices this implementation had to make)."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional


PROVENANCE = {
    "alpha_point": "paper",
    "point_grid_cols": "paper",
    "point_grid_rows": "paper",
    "line_filter_ratio": "paper",
    "ggs_scale": "paper",
    "ggs_grid_rows": "paper",
    "ggs_grid_cols": "paper",
    "kf_coeff": "paper",
    "covis_min_shared": "paper",
    "pgo_covis_share": "paper",
    "lc_alpha": "paper",
    "inlier_min": "paper",
    "lc_rat_threshold": "paper",
}


@dataclass
class RunConfig:
    # association
    alpha_point: float = 1.5
    point_grid_cols: int = 64
    point_grid_rows: int = 48
    point_filter_eps_px2: float = 1.0
    point_filter_singleton: str = "keep"    # "keep" | "image"
    line_filter_ratio: float = 2.0
    line_angle_floor_rad: float = 0.02
    line_dist_floor_px: float = 1.5
    stereo_max_disparity: float = 96.0
    stereo_row_tol: float = 1.0
    # descriptor / keyframing
    ggs_scale: float = 0.8
    ggs_grid_rows: int = 3
    ggs_grid_cols: int = 4
    kf_coeff: float = 0.4
    kf_fallback_interval: int = 10
    # geometry
    min_disparity: float = 1.0
    image_width: int = 1242
    image_height: int = 376
    # dynamics
    enable_dynamics: bool = True
    tau_pt: float = 4.0
    rho: float = 4.0
    dyn_llg_use_sum: bool = False
    # estimation
    enable_lines: bool = True
    huber_delta_px: float = 2.0
    edge_margin_px: float = 20.0
    lm_lambda0: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.5
    lm_max_iters: int = 30
    lm_step_tol: float = 1e-8
    lm_cost_tol: float = 1e-9
    # mapping
    covis_min_shared: int = 20
    ba_max_iters: int = 5
    ba_local_max_neighbors: int = 4         # 0 = unbounded (full 1-hop set)
    kf_attach_gate_px: float = 5.0          # 0 = attach by id unconditionally
    # loop closure
    enable_loop: bool = True
    strict_paper_lcd: bool = False
    exclusion_window: int = 30
    neighbor_factor: float = 1.5
    sim_threshold_factor: float = 2.0
    lc_alpha: float = 0.001
    inlier_min: float = 0.5
    lc_rat_threshold: float = 0.2
    lc_inlier_px: float = 3.0
    lc_min_common: int = 6
    max_drift_frac: float = 0.1
    min_drift_floor_m: float = 0.5
    pgo_covis_share: float = 0.2
    # misc
    seed: int = 0

    def echo(self) -> str:
        """Fully resolved values, one line each, with provenance tags."""
        lines = []
        for f in fields(self):
            tag = PROVENANCE.get(f.name, "repo")
            lines.append(f"config {f.name} = {getattr(self, f.name)} [{tag}]")
        return "\n".join(lines)

    def set_value(self, key: str, raw: str):
        ftypes = {f.name: f.type for f in fields(self)}
        if key not in ftypes:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(self, key)
        if isinstance(current, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw.strip()
        setattr(self, key, value)

    @staticmethod
    def from_file(path) -> "RunConfig":
        cfg = RunConfig()
        with open(path) as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                cfg.set_value(key, value)
        return cfg

    def apply_overrides(self, pairs):
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"--set needs key=value, got {pair!r}")
            key, value = (s.strip() for s in pair.split("=", 1))
            self.set_value(key, value)
        return self

    @staticmethod
    def parse_echo(text: str) -> dict:
        """Inverse of echo(): key -> printed value string (for the echo test)."""
        out = {}
        for line in text.splitlines():
            if not line.startswith("config "):
                continue
            body = line[len("config "):]
            key, rest = body.split(" = ", 1)
            value = rest.rsplit(" [", 1)[0]
            out[key] = value
        return out
