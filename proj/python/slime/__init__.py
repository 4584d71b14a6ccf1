from ._slime import *  # noqa: F401,F403
