import setuptools

requires = [
    'flake8 >= 5.0.0',
    'inflection >= 0.5',
]

flake8_entry_point = 'flake8.extension'

setuptools.setup(
    name='flake8-hscalibrate',
    license='MIT',
    version='0.2.0',
    description='House style checks for the hscalibrate toolkit',
    provides=['flake8_hscalibrate'],
    py_modules=['flake8_hscalibrate'],
    install_requires=requires,
    entry_points={
        flake8_entry_point: [
            'I100 = flake8_hscalibrate:single_quote_strings',
            'I101 = flake8_hscalibrate:multiline_string_on_newline',
            'I103 = flake8_hscalibrate:multiline_string_double_quotes',
            'I105 = flake8_hscalibrate:class_name_camel_case',
            'I106 = flake8_hscalibrate:logger_forbid_passing_self',
            'I107 = flake8_hscalibrate:legacy_global_random',
        ],
    },
    classifiers=[],
)
