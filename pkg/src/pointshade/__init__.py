"""Shaded RGBA previews of raw, normal-free point clouds.

Pipeline: perspective-project the cloud, splat it into an exponential
depth-intensity z-buffer, then run a settings-conditioned U-Net that maps
the z-buffer (plus random Fourier positional features) to a shaded RGBA
image controllable by color, light position and, optionally, material.
"""

__version__ = "0.1.0"
