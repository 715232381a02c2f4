"""SqueezeJet - SqueezeNet v1.1 inference on a modeled fixed-point accelerator"""

__version__ = "0.1.0"
