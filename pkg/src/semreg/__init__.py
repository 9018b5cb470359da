"""semreg: dense semantic scene fusion and model-to-scene pose registration.

Submodules:

* ``geometry``      rigid transforms, labeled clouds, pose-error metrics
* ``ply_io``        labeled point-cloud PLY reader/writer
* ``calibration``   pinhole + Brown-Conrady camera calibration
* ``meshes``        triangle meshes, OBJ/STL I/O, procedural test shapes
* ``raycast``       viewpoint-specific candidate clouds from meshes
* ``fusion``        labeled depth-frame fusion into a surfel map
* ``registration``  ICP model-to-scene alignment over candidate libraries
* ``bench``         synthetic scenes, rendering, end-to-end evaluation
* ``config``        pipeline configuration with validated fields
* ``cli``           the ``semreg`` command-line interface
"""

__version__ = "0.1.0"
