"""Constants for the NARX guard package."""

# Ellipsoids
SYMMETRY_TOL = 1e-10
MIN_EIGENVALUE = 1e-12
MEMBERSHIP_TOL = 1e-9
ROOT_TOL = 1e-10
ROOT_MAX_BRACKET_DOUBLINGS = 200

# Certifier
U_FLOOR = 1e-6
U_CEILING = 1e4
LMI_MARGIN_RETRIES = (1e-5, 1e-4, 1e-3)
FEASIBILITY_TOL = 1e-7
SIGN_TOL = 1e-9

OBJECTIVE_TRACE = "trace"
OBJECTIVE_LOGDET = "logdet"
OBJECTIVES = (OBJECTIVE_TRACE, OBJECTIVE_LOGDET)
# logdet when the backend supports it, trace otherwise
OBJECTIVE_AUTO = "auto"
OBJECTIVE_CHOICES = (OBJECTIVE_AUTO, *OBJECTIVES)

ENV_BACKEND = "NARX_GUARD_BACKEND"
DEFAULT_BACKEND = "cvxpy"

# Detector
VERDICT_ALARM = "alarm"
VERDICT_NO_ALARM = "no_alarm"
VERDICT_INDETERMINATE = "indeterminate"
# status of a step whose bound or membership test hit a numerical failure
STATUS_NUMERICAL = "numerical"
INDETERMINATE_WARN_FRACTION = 0.10

# Training
LR_PLATEAU_PATIENCE = 10
LR_PLATEAU_IMPROVEMENT = 1e-3
LR_DECAY = 0.5
LR_MIN_FRACTION = 1e-3
HIDDEN_BIAS_INIT = 0.1
SCALE_FLOOR = 1e-12

# Plants
SYSTEM_BEAM = "beam"
SYSTEM_TANKS = "tanks"
SYSTEMS = (SYSTEM_BEAM, SYSTEM_TANKS)

BEAM_CONTRACTION = 0.8
BEAM_ANGLE = 0.6  # multiples of pi per step
BEAM_INIT_LOW = -2.0
BEAM_INIT_HIGH = 2.0

TANK_Q_IN = 15.0
TANK_DISCHARGE = 0.9
TANK_DRAIN_AREA = 1.0
TANK_DT = 0.02
TANK_SUBSTEPS = 10
TANK_INIT_LOW = 5.0
TANK_INIT_HIGH = 25.0
G_SI = 9.81
G_CGS = 981.0

FAULT_NONE = "none"
FAULT_VIBRATION = "vibration"
FAULT_SENSOR_BIAS = "sensor_bias"
FAULT_DRAIN_BLOCKAGE = "drain_blockage"
FAULT_KINDS = (FAULT_NONE, FAULT_VIBRATION, FAULT_SENSOR_BIAS, FAULT_DRAIN_BLOCKAGE)

# CLI
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_WARNING = 3

MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.txt"
WEIGHTS_FILE = "weights.json"
IDEAL_WEIGHTS_FILE = "weights_ideal.json"
METRICS_FILE = "training_metrics.json"

# Experiment config keys
CONF_NAME = "name"
CONF_SYSTEM = "system"
CONF_PLANT = "plant"
CONF_WINDOW = "window"
CONF_P_BAR = "p_bar"
CONF_SIGMA_V = "sigma_v"
CONF_ARCHITECTURE = "architecture"
CONF_TRAINING = "training"
CONF_TRAJECTORIES = "trajectories"
CONF_STEPS = "steps"
CONF_DETECTION = "detection"
CONF_INITIAL_STATE = "initial_state"
CONF_SEED = "seed"
CONF_WORKERS = "workers"
CONF_SCENARIOS = "scenarios"
CONF_FAULT = "fault"
CONF_REFERENCE_RATE = "reference_rate"
CONF_OBJECTIVE = "objective"
CONF_USE_INTERVAL_BOUNDS = "use_interval_bounds"
CONF_OUTPUT_DIR = "output_dir"
CONF_COMPARE_STEPS = "compare_steps"

DEFAULT_DETECTION_STEPS = 2000
DEFAULT_COMPARE_STEPS = 20
TRAINING_FILE = "training.csv"
DATASET_FILE = "dataset.csv"
IDEAL_DATASET_FILE = "dataset_ideal.csv"
TRAJECTORY_DIR = "trajectories"
ALARM_DIR = "alarms"
INPUT_QC_FILE = "input_qc_comparison.csv"
LMI_DIR = "lmi"
TRAINING_NOISE_FILE = "training_noise.csv"
TRAINING_NOISE_ELLIPSES_FILE = "training_noise_ellipses.csv"
DEFAULT_RUN_ROOT = "runs"
ELLIPSE_TRACE_POINTS = 64
