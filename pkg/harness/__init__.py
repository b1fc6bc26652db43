# Run harness: configuration, performance accounting, run drivers and CLI
