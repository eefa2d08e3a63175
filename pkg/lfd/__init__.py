# Lfd package
