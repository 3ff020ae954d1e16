"""equidet: degradation-equivariant object detection at desk scale.

A blur/downsample/noise degradation engine, a synthetic-shapes detection
dataset, a siamese center-point detector with transformation-prediction
and any-resolution restoration decoders, and an evaluation harness for
comparing training schemes.
"""

__version__ = "0.1.0"
