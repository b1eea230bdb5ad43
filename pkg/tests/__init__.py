# enkf-lab test suite
