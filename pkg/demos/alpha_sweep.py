"""How the mix between contrastive and regression loss affects retrieval.

alpha=0 trains on the contrastive term only, alpha=1 on the squared error
only. Usage: ``python3 demos/alpha_sweep.py [steps]``.
"""

import sys

from m3jepa import evaluation as ev
from m3jepa.config import preset
from m3jepa.pipeline import alpha_runner, variant

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
doc = variant(preset("two-modal-noisy"), 0, **{"train.steps": steps}).to_doc()

rows = ev.alpha_sweep([0.0, 0.25, 0.5, 0.75, 1.0], alpha_runner(doc))
print(ev.emit_sweep_csv(rows), end="")
