import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

version = {}
with open("pydorf/version.py") as fp:
    exec(fp.read(), version)

setuptools.setup(
    name="pydorf",
    version=version['__version__'],
    author="pydorf developers",
    description="Domain-independent activity recognition from Wi-Fi channel state information",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['test', 'test.*']),
    entry_points={
            'console_scripts': ['pydorf = pydorf.cli:main']
    },
    license='MIT',
    install_requires=['dacite',
                      'numpy',
                      'enforce_typing',
                      'tabulate',
                      'scipy',
                      'numba',
                      'scikit-learn',
                      'torch>=2.0',
                      'matplotlib'],
    python_requires='>=3.8',
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering",
        "Development Status :: 3 - Alpha"
    ],
)
