"""Mesh deformation losses, template fitting and surface evaluation for cortical meshes."""
from .mesh import (AdjacencyInfo, Mesh, MeshError, MeshNormals, NonManifoldError, TopologyReport,
                   build_adjacency, subdivide_midpoint, topology_report, vertex_and_face_normals)
from .io import MeshFormatError, load_mesh, save_mesh, write_mesh
from .spatial import (PointIndex, SurfaceIndex, build_point_index, build_surface_index,
                      closest_point_on_surface, knn, self_intersections, triangles_intersect)
from .geometry import (CurvatureField, SampledCloud, curvature_weight, mean_curvature,
                       reposition, sample_surface)
from .losses import (LossWeights, PIAL_WEIGHTS, WM_WEIGHTS, chamfer_classic, chamfer_curvature,
                     edge_loss, inter_normal_consistency, intra_normal_consistency,
                     laplacian_absolute, laplacian_displacement, total_mesh_loss)
from .optimizer import (DeformConfig, FitError, FitResult, GraphConvParams, fit,
                        graph_conv_forward, graph_conv_vjp)
from .metrics import (MetricsReport, RigidTransform, assd, compare_surfaces, consistency_report,
                      cortical_thickness, hausdorff, icp_rigid)
from .template import SmoothConfig, icosahedron, laplacian_smooth, make_icosphere
from ._threads import get_threads, set_threads

__version__ = "0.1.0"
