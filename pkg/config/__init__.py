# Config package - contains default configuration files
