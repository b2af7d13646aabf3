# Root conftest.py: puts the project root on sys.path and makes tensors
# created inside tests fp64 like the package's own.
import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_default_dtype(torch.float64)
