# Flow solvers: vortex particle method, pseudo-spectral reference and shared fields
