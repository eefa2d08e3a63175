# Trajopt package
