# Test package for mmimo-sim
