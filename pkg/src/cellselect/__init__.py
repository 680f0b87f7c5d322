"""cellselect: budgeted support-set selection for few-shot cell segmentation.

Pipeline: pretrain an encoder-decoder on labeled source datasets, adapt it to
an unlabeled target via classical-filter pseudo-labels, score candidate target
patches by prediction inconsistency under pixel-level augmentations, select a
budget-exact support set for expert annotation, fine-tune, evaluate.
"""

__version__ = "0.1.0"
