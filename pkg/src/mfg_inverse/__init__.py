"""Forward simulation, CGO probing and Taylor coefficient recovery for
first order mean field games with Neumann boundary data."""

__version__ = "0.1.0"
