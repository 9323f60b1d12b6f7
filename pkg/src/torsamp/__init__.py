"""torsamp: Boltzmann sampling of molecular torsion angles with a
conditional continuous GFlowNet and a torque-projection GNN policy."""

__version__ = "0.1.0"

from .energy import AnalyticOracle, AnalyticTorsionPotential, ExternalOracle, Reward, TableOracle
from .geometry import Conformation, LocalStructure, TorusPoint, measure_torsions, metric_tensor, set_torsions
from .gfn import Condition, ReplayBuffer, TrainConfig, train, vargrad_loss
from .gnn import MoleculeFeatures, TorqueGNN, TorqueGNNConfig
from .molio import Atom, Bond, MoleculeGraph, TorsionSpec, load_conformations, load_molecule
from .torus import MixtureParams, Trajectory, vm_mixture_logpdf, vm_mixture_sample

__all__ = [
    "__version__",
    "Atom", "Bond", "MoleculeGraph", "TorsionSpec",
    "Conformation", "LocalStructure", "TorusPoint",
    "MixtureParams", "Trajectory",
    "AnalyticOracle", "AnalyticTorsionPotential", "ExternalOracle", "Reward", "TableOracle",
    "Condition", "ReplayBuffer", "TrainConfig",
    "MoleculeFeatures", "TorqueGNN", "TorqueGNNConfig",
    "load_molecule", "load_conformations",
    "measure_torsions", "set_torsions", "metric_tensor",
    "vm_mixture_logpdf", "vm_mixture_sample", "vargrad_loss", "train",
]
