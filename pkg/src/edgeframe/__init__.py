"""edgeframe: a desk-scale edge offloading platform.

A platform server dispatches services from user context over an emulated
edge network; a navigation service and a face recognition service run
server-side, a simulated AR-glass client drives them, and a benchmark
harness compares edge against local and cloud execution.
"""

__version__ = "0.1.0"
