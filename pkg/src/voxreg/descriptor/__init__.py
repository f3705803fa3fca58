"""Corner descriptors: rotated neighborhoods, the triplet-trained network, and the gradient-histogram baseline."""

from .neighborhood import (ExcludedCornerError, Neighborhood, angle_lattice, extract_neighborhood, extract_rotated,
                           orientation_lattice, rotation_matrix)
from .network import (DescriptorNet, WeightsFormatError, batch_triplet_loss, load_weights, net_backward, net_forward,
                      net_loss_and_grads, save_weights, triplet_loss)
from .sift3d import SiftConfig, sift3d_descriptor, sift3d_descriptors
from .training import (DatasetError, NeighborhoodDataset, eval_error_rate, load_dataset, save_dataset,
                       synthesize_training_set, train)
