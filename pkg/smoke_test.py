"""Smoke test: checks that the package and its dependencies import. Used by CI after install."""

import sys

errors = []

try:
    import torch
    import torch.nn.functional as F
    F.grid_sample(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 1, 1, 3), align_corners=True)
except Exception as e:
    errors.append(f"torch: {e}")

try:
    import numpy as np
    np.random.SeedSequence(0).generate_state(1)
except Exception as e:
    errors.append(f"numpy: {e}")

try:
    from skimage import measure
    measure.marching_cubes(np.pad(np.ones((2, 2, 2)), 1), level=0.5)
except Exception as e:
    errors.append(f"scikit-image: {e}")

try:
    import trimesh
    from trimesh.exchange.obj import export_obj
    from trimesh.exchange.ply import export_ply
except Exception as e:
    errors.append(f"trimesh: {e}")

try:
    from PIL import Image
    Image.new("RGB", (2, 2))
except Exception as e:
    errors.append(f"Pillow: {e}")

try:
    import yaml
    yaml.safe_load("a: 1")
except Exception as e:
    errors.append(f"PyYAML: {e}")

try:
    from rich.console import Console
    from rich.progress import Progress
    from rich.table import Table
except Exception as e:
    errors.append(f"rich: {e}")

try:
    import src.__main__  # noqa: F401
except Exception as e:
    errors.append(f"src: {e}")

if errors:
    for err in errors:
        print(f"FAIL: {err}", file=sys.stderr)
    sys.exit(1)
else:
    print("All imports OK")
