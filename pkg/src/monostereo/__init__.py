"""Classical two-view and multi-view depth estimation for a moving monocular
camera: coarse-to-fine epipolar flow, relative pose, triangulation and
confidence-weighted fusion, plus a synthetic ground-truth scene generator.

Import the submodules directly (``monostereo.pipeline``, ``monostereo.synth``
and so on); the package root stays light so the command line can cap thread
counts before numerical libraries load.
"""

__version__ = "0.1.0"
