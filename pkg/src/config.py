import os

##########
# Solver #
##########

# Conic backends in order of preference, filtered by `cvxpy.installed_solvers()`
SOCP_SOLVERS = ["CLARABEL", "ECOS", "SCS"]
SDP_SOLVERS = ["CLARABEL", "SCS"]

# KKT residual tolerance requested from the conic backend
SOLVER_TOL = float(os.environ.get("TUBE_MPC_SOLVER_TOL", 1e-8))
SOLVER_MAX_ITER = int(os.environ.get("TUBE_MPC_SOLVER_MAX_ITER", 200))
SOLVER_TIME_LIMIT = float(os.environ.get("TUBE_MPC_SOLVER_TIME_LIMIT", 60.0))

# Environment overrides for the preferred backend, e.g. `TUBE_MPC_SOCP_SOLVER=SCS`
SOCP_SOLVER_ENV = "TUBE_MPC_SOCP_SOLVER"
SDP_SOLVER_ENV = "TUBE_MPC_SDP_SOLVER"

# Row violation accepted when validating a returned optimum
VALIDATION_TOL = 1e-6

############
# Geometry #
############

# Absolute tolerance for polytope membership and positive definiteness
MEMBERSHIP_TOL = 1e-9

# Largest number of box vertices enumerated by interval Jacobian bounds
MAX_BOX_VERTICES = 2 ** 12

############
# Terminal #
############

# Upper limit of the terminal horizon search
N_HAT_MAX = 64

# Smallest eigenvalue imposed on S = V^{-1} in the terminal LMI
LMI_MIN_EIG = 1e-6

# Relative margin of sigma over the largest disturbance V-norm
SIGMA_FLOOR = 1e-6

# "lemma": gamma^2 = 1 / (1 - lambda_hat^{1/2})
# "algorithm": gamma = 2 ||V^{-1/2}||^2_Qhat / (1 - lambda_hat^{1/2})
GAMMA_RULE = "lemma"

# "socp" solves the horizon check as a conic program, "recursion" evaluates it in
# closed form from the largest admissible ||z_N||_V
HORIZON_METHOD = "socp"

##############
# Controller #
##############

ITER_MAX = 10
TOLERANCE = 1e-3
LINE_SEARCH_MAXITER = 8

# Solver round-off allowance on the cost decrease rows
COST_DECREASE_SLACK = 1e-8

# Initial feasibility repair
INIT_ROUNDS = 10
INIT_SLACK_TOL = 1e-8

#############
# Estimator #
#############

# Number of stored transitions used by each set-membership update
N_THETA_WINDOW = 5

#############
# Benchmark #
#############

HORIZON = 10
SIM_STEPS = 10
INSTANCES = 20
N_W = 2

W_BOUND = 0.01
XHAT_BOUND = 1.5
U_BOUND = 1.0
S_OFFSET = 0.5

# Scale of the true parameter and radius of the initial parameter set around it
THETA_SCALE = 0.1
THETA_RADIUS = 0.05

SPECTRAL_RADIUS = 1.2
MAX_REDRAWS = 50
INIT_TRIES = 100
INIT_STATE_BOUND = 1.0

# (n_x, n_u, n_theta) ladder run by `tube-mpc sweep` when no sizes are given
SWEEP_SIZES = [(2, 1, 2), (4, 2, 2), (4, 2, 4), (6, 2, 4)]
