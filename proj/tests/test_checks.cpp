// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "ssmamba/checks.hpp"

using namespace ssm;

TEST(Checks, InvariantSuitePasses) {
  for (const auto& [id, fn] : checks::invariant_suite()) {
    const auto g = checks::run(fn, id, "group");
    EXPECT_FALSE(g.results.empty());
    for (const auto& r : g.results) EXPECT_TRUE(r.pass) << id << ": " << r.name << " " << r.detail;
  }
}

TEST(Checks, ExceptionBecomesFailure) {
  const auto g = checks::run([]() -> checks::Group { throw std::runtime_error("boom"); }, 5, "t");
  EXPECT_FALSE(g.pass());
  EXPECT_EQ(g.results.at(0).detail, "boom");
}
