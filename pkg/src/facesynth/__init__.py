"""PCA morphable face models with texture-coupled geometry synthesis.

The package builds linear statistical models of aligned facial geometry and
texture, couples new textures to plausible geometries through four estimator
variants, ships the upstream landmark-guided template alignment, and provides
evaluation harnesses (cross-validated recovery error, sliced Wasserstein
distance, identity distance curves).
"""

from .alignment import AlignmentParams, AlignmentResult, align_template, alignment_energy, transfer_texture
from .coupling import (
    VARIANT_LEAST_SQUARES,
    VARIANT_MAX_LIKELIHOOD,
    VARIANT_NEAREST,
    VARIANT_RANDOM,
    VARIANTS,
    CouplingModel,
    estimate_joint_coefficients,
    fit_coupling,
    least_squares_weights,
    load_coupling,
    ml_objective,
    neutralize_corpus,
    save_coupling,
    synthesize_geometry,
)
from .errors import CorpusError, FaceSynthError, FormatError, NumericalError
from .evaluation import (
    CvReport,
    DistanceCurves,
    SwdReport,
    cross_validate,
    identity_descriptor,
    load_descriptors,
    nn_distances,
    save_descriptors,
    sliced_wasserstein,
)
from .mesh import (
    AlignedCorpus,
    CorpusEntry,
    ScanMesh,
    TemplateTopology,
    load_scan,
    load_template,
    load_texture,
    rasterize_vertex_colors,
    sample_texture,
    save_obj,
    save_texture,
    uv_coverage_mask,
    vertex_colors_from_texture,
)
from .morphable import (
    Coefficients,
    JointModel,
    MorphableModel,
    build_joint_model,
    build_joint_model_from_matrices,
    build_model,
    build_model_from_matrices,
    load_model,
    project,
    project_joint,
    reconstruct,
    reconstruct_joint,
    sample_coefficients,
    save_model,
)
from .spatial import MeshQuery, closest_point_on_mesh
from .synthetic import SyntheticCorpusSpec, generate_corpus, make_template

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
