#include <catch2/catch_amalgamated.hpp>
#include "uld/engine.hpp"
