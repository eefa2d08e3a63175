# Dynamics package
