from setuptools import setup, find_packages

d = {}
exec(open("attackprofiling/version.py").read(), None, d)
version = d['version']
long_description = open("README.md").read()

pkg_name = "attackprofiling"

setup(
    name=pkg_name,
    version=version,
    description="Desk-scale toolkit to generate adversarial corpora and profile which attack produced an input",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(),
    package_data={},
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'joblib',
        'tqdm',
        'pillow',
    ],
    extras_require={
        'test': ['pytest', 'hypothesis'],
    },
    entry_points={
        'console_scripts': ['attackprofiling=attackprofiling.cli:main'],
    },
    classifiers=(
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
    )
)
