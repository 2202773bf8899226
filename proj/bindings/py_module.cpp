#include <pybind11/pybind11.h>

PYBIND11_MODULE(mavt, m) { m.doc() = "placeholder"; }
