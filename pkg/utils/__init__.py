# Utils module for logging, configuration loading and output helpers
