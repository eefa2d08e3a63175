# Sim package
