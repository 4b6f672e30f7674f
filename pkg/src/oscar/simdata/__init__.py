from .phantoms import AcousticSpec, Phantom, PhantomSpec, make_phantom
from .simulate import (SweepTrajectory, default_sweeps, oracle_render, oracle_scanlines,
                       simulate_sweep)
