from dataclasses import dataclass
from dotenv import load_dotenv
import os

load_dotenv()

@dataclass
class Config:
    # Truncation / grids
    trunc: int = int(os.getenv("QP_TRUNC", "8"))
    grid: int = int(os.getenv("QP_GRID", "0"))  # 0 = 2N+2
    pad_factor: int = int(os.getenv("QP_PAD_FACTOR", "2"))
    tail_ratio: float = float(os.getenv("QP_TAIL_RATIO", "1e-6"))
    n_check: int = int(os.getenv("QP_N_CHECK", "12"))
    delta_indep: float = float(os.getenv("QP_DELTA_INDEP", "1e-6"))

    # Optimizer
    g_tol: float = float(os.getenv("QP_G_TOL", "1e-9"))
    max_iter: int = int(os.getenv("QP_MAX_ITER", "3000"))
    lbfgs_history: int = int(os.getenv("QP_LBFGS_HISTORY", "10"))
    armijo_c1: float = float(os.getenv("QP_ARMIJO_C1", "1e-4"))
    backtrack: float = float(os.getenv("QP_BACKTRACK", "0.5"))
    max_backtracks: int = int(os.getenv("QP_MAX_BACKTRACKS", "60"))
    barrier_beta0: float = float(os.getenv("QP_BARRIER_BETA0", "1e-3"))
    barrier_factor: float = float(os.getenv("QP_BARRIER_FACTOR", "0.5"))
    barrier_min: float = float(os.getenv("QP_BARRIER_MIN", "1e-9"))

    # Condition sampling
    cond_resolution: int = int(os.getenv("QP_COND_RESOLUTION", "24"))
    cond_torus_grid: int = int(os.getenv("QP_COND_TORUS_GRID", "8"))
    eps_bnd: float = float(os.getenv("QP_EPS_BND", "1e-3"))
    delta_crit: float = float(os.getenv("QP_DELTA_CRIT", "1e-4"))
    delta_pd: float = float(os.getenv("QP_DELTA_PD", "1e-6"))
    delta_strict: float = float(os.getenv("QP_DELTA_STRICT", "1e-8"))
    sectional_restarts: int = int(os.getenv("QP_SECTIONAL_RESTARTS", "8"))

    # Connecting map
    tol_bvp: float = float(os.getenv("QP_TOL_BVP", "1e-8"))
    bvp_max_iter: int = int(os.getenv("QP_BVP_MAX_ITER", "50"))
    bvp_segments: int = int(os.getenv("QP_BVP_SEGMENTS", "8"))

    # Verification / dichotomy
    window: float = float(os.getenv("QP_WINDOW", "100"))
    dt: float = float(os.getenv("QP_DT", "0.01"))
    gap_min: float = float(os.getenv("QP_GAP_MIN", "0.05"))
    reorth_dt: float = float(os.getenv("QP_REORTH_DT", "1.0"))
    dichotomy_window: float = float(os.getenv("QP_DICHOTOMY_WINDOW", "50"))

    # Runs
    seed: int = int(os.getenv("QP_SEED", "0"))
    log_dir: str = os.getenv("QP_LOG_DIR", "logs")
    out_dir: str = os.getenv("QP_OUT_DIR", "runs")
    csv_digits: int = int(os.getenv("QP_CSV_DIGITS", "17"))

cfg = Config()
