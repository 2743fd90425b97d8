"""Class labels as a third, one-hot modality.

Task 3 predicts the label embedding from x; the predicted class is the
nearest one-hot vector. Also prints the MoE vs MLP vs joint-training table.
It trains three models on 16k rows each and takes a few minutes.
"""

from m3jepa.config import preset
from m3jepa.pipeline import ablate, format_table

rows = ablate(preset("three-modal-with-labels"), "table5", seeds=(0,))
print(format_table(rows))
