"""Learn Hamiltonians from trajectories with spline-edge (Kolmogorov-Arnold) networks.

The learned model is a scalar energy ``H(q, p)``; dynamics follow the
symplectic field ``dz/dt = J grad H``.  Perceptron Hamiltonians and an
unconstrained baseline are provided for comparison, together with four
benchmark systems and the metrics used to compare them.
"""

__version__ = "0.1.0"

from .errors import (
    DegreeError,
    DivergenceError,
    FormatError,
    IntegrationError,
    ModelKindError,
    NumericalError,
    ShapeError,
    SingularityError,
    SympkanError,
    UsageError,
)
from .models import (
    BaselineNet,
    KarHamiltonian,
    MlpHamiltonian,
    TrueSystem,
    baseline_forward,
    deserialize_model,
    eval_hamiltonian,
    grad_wrt_inputs,
    load_model,
    save_model,
    serialize_model,
    symplectic_matrix,
    symplectic_vector_field,
)
from .presets import PRESETS, ExperimentPreset, get_preset, scaled
from .spline import SplineGrid, UnivariateEdge, bspline_basis, bspline_basis_derivative
from .systems import (
    Dataset,
    SystemSpec,
    Trajectory,
    build_dataset,
    hamiltonian,
    integrate,
    read_dataset,
    true_vector_field,
    write_dataset,
)
from .training import TrainConfig, TrainHistory, train
from .evaluation import derivative_mse, energy_drift, evaluate_model, reproduce_table, rollout
