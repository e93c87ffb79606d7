"""Virtual staining and stain transformation of kidney tissue images, at desk scale.

Modules: ``engine`` (autograd and optimiser), ``nets`` (U-Net generator,
discriminator, checkpoints), ``losses``, ``registration``, ``datapipe``
(colour space, augmentation, phantom data), ``trainer``, ``slides`` (tiled
inference and staining paths), ``study`` (adjudication tallies) and ``cli``.
"""

__version__ = "0.1.0"
