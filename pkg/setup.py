#!/usr/bin/env python

from setuptools import setup

from pimgpt import __version__


LONG_DESCRIPTION = open('README.rst').read()


setup(
    name='pimgpt',
    version=__version__,
    description='Clock-level simulator of GPT decoding on processing-in-memory DRAM with an ASIC companion',
    long_description=LONG_DESCRIPTION,
    packages=['pimgpt', 'pimgpt.numerics'],
    package_data={'pimgpt': ['data/catalog.yaml']},
    install_requires=['numpy>=1.17', 'PyYAML>=5.1'],
    python_requires='>=3.7',
    entry_points={'console_scripts': ['pimgpt = pimgpt.cli:main']},
    keywords=['pim', 'dram', 'transformer', 'gpt', 'simulator', 'bfloat16'],
    classifiers=[
        'Development Status :: 3 - Alpha',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Operating System :: OS Independent',
        'Intended Audience :: Science/Research',
        'Topic :: System :: Hardware',
        'Topic :: Scientific/Engineering',
    ],
)
