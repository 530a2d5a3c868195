from .dynamics import *
from .solver import *
from .cooperation import *
from .ocp import *
from .orchestrator import *
from .diagnostics import *

__version__ = "0.1.0"
