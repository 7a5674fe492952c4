"""Certified reduced-basis toolkit for buoyancy-driven flow in a cavity of variable height."""
