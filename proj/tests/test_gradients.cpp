#include <doctest.h>

#include "fsa/gradcheck.hpp"

TEST_SUITE_BEGIN("gradients");

TEST_CASE("finite-difference suite passes at 1e-3") {
    const auto reports = fsa::run_gradient_checks(42);
    CHECK(reports.size() > 30);
    for (const auto& r : reports) {
        INFO(r.name, " max_rel=", r.max_rel);
        CHECK(r.pass);
    }
}

TEST_SUITE_END();
