# FMM engine: particle model, expansions, tree, traversal, partitioning and LET exchange
