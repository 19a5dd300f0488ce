"""Image-guided point cloud completion on a small numpy autodiff engine."""
