"""Registration of overlapping 3D density grids by corner matching and RANSAC."""

from .detect import Corner, HarrisConfig, detect_corners, harris_response, sobel_gradients
from .match import MatchCandidate, match_descriptors, similarity
from .register import RansacConfig, RegistrationResult, SimilarityTransform, fit_similarity, pair_error, ransac_register
from .volume import (DensityGrid, GridPyramid, anisotropic_diffusion, average_pool, build_pyramid, load_grid,
                     sample_trilinear, save_grid)

__version__ = "0.1.0"
