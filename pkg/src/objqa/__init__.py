"""Recognition-oriented quality scores for single-object images.

Relative scores compare a feature vector with an attention-synthesized class
template; absolute scores come from a small network trained to agree with
the relative ranking inside a class and across classes.
"""
from . import aqa, dataio, evalgate, extractor, numerics, rqa

__all__ = ["aqa", "dataio", "evalgate", "extractor", "numerics", "rqa"]
