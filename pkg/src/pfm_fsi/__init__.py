"""Particle flow-map fluid solver with impulse gauge and MPM / IBM solid coupling."""
