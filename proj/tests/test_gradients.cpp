#include <catch_amalgamated.hpp>

#include <set>

#include "transferattn/gradcheck.hpp"
#include "transferattn/gradsuite.hpp"
#include "support.hpp"

using namespace transferattn;

TEST_CASE("checker flags a wrong gradient") {
  Rng rng(1);
  Tensor x = testing_support::random_tensor({4}, rng);
  // detach hides half of d(x^2)/dx from autodiff
  auto r = grad_check([&] { return sum(mul(x, x.detach())); }, {x});
  CHECK(r.max_rel_error > 0.4);
  auto ok = grad_check([&] { return sum(mul(x, x)); }, {x});
  CHECK(ok.max_rel_error < 1e-8);
}

TEST_CASE("every case of the gradient suite passes") {
  const char* scope = GENERATE("ops", "encoder", "dtab", "heads");
  for (const auto& rep : run_gradient_suite(scope, 4, 1e-4, 1234)) {
    INFO(rep.scope << "/" << rep.name << " worst " << rep.worst_rel << " at " << rep.worst_where);
    CHECK(rep.instances == 4);
    CHECK(rep.passed);
  }
}

TEST_CASE("suite covers every scope") {
  std::set<std::string> scopes;
  std::size_t n = 0;
  for (const auto& c : gradient_cases()) {
    scopes.insert(c.scope);
    ++n;
  }
  CHECK(scopes == std::set<std::string>{"ops", "encoder", "dtab", "heads"});
  CHECK(n >= 40);
  CHECK_THROWS_AS(run_gradient_suite("everything", 1, 1e-4), ConfigError);
}
