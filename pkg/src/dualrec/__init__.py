"""dualrec: dual-domain cascaded MRI reconstruction on synthetic phantoms.

Subpackages build on each other roughly bottom-up:

    autodiff   reverse-mode engine over numpy arrays
    layers     Module/Conv2d building blocks and optim helpers
    fourier    centered orthonormal FFTs and the trainable transform layer
    masks      k-space undersampling patterns with a self-contained PRNG
    fidelity   data-consistency and variable-splitting operators
    networks   KI/II/fusion blocks, feature guidance, perceptual refinement
    cascade    unrolled reconstruction models and training loops
    metrics    PSNR / SSIM / VIF
    phantoms   synthetic data generation and the RTC container format
    cli        command line driver (``dualrec`` entry point)
"""

__version__ = "0.1.0"
