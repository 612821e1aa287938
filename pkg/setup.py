#!/usr/bin/env python
from setuptools import setup, find_packages
from hmlet import __version__


with open('README.md') as fh:
    long_description = fh.read()


CLASSIFIERS = [
    'Development Status :: 3 - Alpha',
    'Environment :: Console',
    'Framework :: Django',
    'Intended Audience :: Science/Research',
    'License :: OSI Approved :: MIT License',
    'Operating System :: OS Independent',
    'Programming Language :: Python',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
    'Programming Language :: Python :: 3.9',
    'Programming Language :: Python :: 3.10',
    'Programming Language :: Python :: 3.11',
    'Framework :: Django :: 4.0',
    'Framework :: Django :: 4.1',
]

setup(
    name='django-hmlet',
    version=__version__,
    description='Graph convolutional collaborative filtering with gated linear and non-linear propagation',
    packages=find_packages(exclude=['testapp', 'docs']),
    install_requires=[
        'django>=4.0',
        'numpy>=1.22',
        'scipy>=1.8',
    ],
    extras_require={
        'test': ['pytest', 'pytest-django', 'pytest-mock', 'networkx'],
    },
    entry_points={
        'console_scripts': ['hmlet=hmlet.__main__:main'],
    },
    license='MIT',
    platforms=['OS Independent'],
    keywords=['Django', 'recommender systems', 'graph convolution', 'collaborative filtering'],
    classifiers=CLASSIFIERS,
    long_description=long_description,
    long_description_content_type='text/markdown',
    include_package_data=True,
    zip_safe=False,
)
