#pragma once

#include <memory>
#include <string>

#include "unsr/matrix_game.hpp"
#include "unsr/pp_grid.hpp"

namespace unsr {

inline std::unique_ptr<Env> make_env(const std::string& name, const PpGridConfig& pp_cfg = {}) {
  if (name == "coordination-game")
    return std::make_unique<MatrixGame>(make_coordination_game());
  if (name == "nonmono-game") return std::make_unique<MatrixGame>(make_nonmono_game());
  if (name == "pp-grid") return std::make_unique<PpGrid>(pp_cfg);
  throw UsageError("unknown environment: " + name);
}

}  // namespace unsr
