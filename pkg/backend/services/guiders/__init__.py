"""
Emission guiders
Gaussian mixture guider and the uniform, bound, 2D histogram, vMF and MCMC baselines
"""
