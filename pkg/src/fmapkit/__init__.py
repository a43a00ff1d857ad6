"""Spectral shape correspondence with a regularized, differentiable functional-map layer."""

from .convert import PointMap, fmap_to_pointmap, icp_refine, read_pointmap, write_pointmap, zoomout
from .evaluate import accuracy_curve, geodesic_from, mean_geodesic_error, write_report
from .fmap import (
    FuncMap,
    GroundTruthMap,
    SingularSystemError,
    SolveContext,
    gt_from_pointmap,
    gt_from_template,
    read_fmap,
    solve_backward,
    solve_regularized,
    solve_unregularized,
    spectral_loss,
    write_fmap,
)
from .mesh import (
    Mesh,
    PointCloud,
    SamplingHierarchy,
    build_hierarchy,
    grid_subsample,
    load_mesh,
    normalize_mesh,
    radius_neighbors,
    save_off,
)
from .spectral import (
    DescriptorField,
    LaplaceOperators,
    SpectralBasis,
    cotan_laplacian,
    eigendecompose,
    hks,
    load_basis,
    project,
    reconstruct,
    save_basis,
    wks,
)

__version__ = "0.1.0"
