"""Physical constants."""

import math

#: vacuum permeability [T m / A]
MU0 = 4e-7 * math.pi
