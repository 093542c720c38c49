from os import path

import setuptools

here = path.abspath(path.dirname(__file__))

with open(path.join(here, "README.md"), encoding="utf-8") as f:
    long_description = f.read()

setuptools.setup(
    # Meta-data
    name="kinefit",
    description="Markerless motion capture kinematics: skeletal models, two-view reconstruction and "
                "biomechanics-aware losses for Pytorch",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
    ],

    # Versioning
    use_scm_version={"root": ".", "relative_to": __file__, "write_to": "kinefit/_version.py",
                     "fallback_version": "0.1.0"},

    # Requirements
    setup_requires=["setuptools_scm"],
    install_requires=["torch", "numpy", "scipy", "pandas", "matplotlib", "Pillow", "tensorboardX"],
    extras_require={"test": ["pytest"]},
    python_requires=">=3.8, <4",

    # Package description
    packages=["kinefit"],
    package_data={"kinefit": ["data/*.kmodel"]},
    entry_points={"console_scripts": ["kinefit=kinefit.cli:main"]}
)
