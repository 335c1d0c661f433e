"""Modular aided-inertial estimation with meshed UWB ranging."""
