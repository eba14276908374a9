"""Reflectance-guided image harmonization on synthetic Retinex scenes.

Modules: ``retinex`` (scene synthesis), ``blocks`` / ``unet`` (network
pieces), ``reflectance`` (diverse reflectance generator), ``harmonizer``,
``metrics``, ``train``, ``evaluate``, ``dataio`` and ``cli``.
"""

__version__ = "0.1.0"
