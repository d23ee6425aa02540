// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include "prbfpn/blocks.hpp"

namespace prbfpn {

namespace {

std::string core_id(int n, int s) { return "p" + std::to_string(n) + "_core" + std::to_string(s); }
std::string backbone_id(int level) { return "backbone_l" + std::to_string(level); }
std::string integrate_id(int s) { return "integrate_s" + std::to_string(s); }
std::string bfm_id(int s) { return "bfm_s" + std::to_string(s); }

}  // namespace

template <typename T>
std::string export_topology(const PrbFpnModel<T>& model) {
  const auto& cfg = model.config();
  const int L = cfg.L;
  const int N = cfg.N;
  std::ostringstream os;
  os << "digraph prbfpn {\n";
  os << "  // L=" << L << " N=" << N << " c_fuse=" << cfg.c_fuse << " c_head=" << cfg.c_head
     << " residual=" << cfg.use_residual << " parallel=" << cfg.use_parallel << " bfm=" << cfg.use_bfm << "\n";

  for (int level = 1; level <= L; ++level) {
    os << "  " << backbone_id(level) << " [label=\"backbone L" << level << "\", kind=\"backbone\", level="
       << level << "];\n";
  }
  for (const auto& path : model.paths()) {
    for (std::size_t s = 1; s <= path.blocks.size(); ++s) {
      const auto& b = path.blocks[s - 1];
      os << "  " << core_id(path.index, static_cast<int>(s)) << " [label=\"path" << path.index << " core" << s
         << " L" << b.core.level << "\", kind=\"" << (b.skip_proj ? "recore" : "core") << "\", path="
         << path.index << ", level=" << b.core.level << "];\n";
    }
  }
  for (int s = 1; s <= N; ++s) {
    os << "  " << integrate_id(s) << " [label=\"integrate s" << s << " L" << prediction_level(s, L)
       << "\", kind=\"integrate\", level=" << prediction_level(s, L) << "];\n";
  }
  if (model.bfm()) {
    for (int s = N - 1; s >= 1; --s) {
      os << "  " << bfm_id(s) << " [label=\"bfm s" << s << " L" << prediction_level(s, L)
         << "\", kind=\"bfm\", level=" << prediction_level(s, L) << "];\n";
    }
  }

  for (int level = 2; level <= L; ++level) {
    os << "  " << backbone_id(level - 1) << " -> " << backbone_id(level) << " [kind=\"down\"];\n";
  }
  for (const auto& path : model.paths()) {
    for (std::size_t s = 1; s <= path.blocks.size(); ++s) {
      const auto& core = path.blocks[s - 1].core;
      const std::string id = core_id(path.index, static_cast<int>(s));
      if (core.has_shallow) os << "  " << backbone_id(core.level - 1) << " -> " << id << " [kind=\"shallow\"];\n";
      if (core.has_current) os << "  " << backbone_id(core.level) << " -> " << id << " [kind=\"current\"];\n";
      if (core.has_deep) os << "  " << backbone_id(core.level + 1) << " -> " << id << " [kind=\"deep\"];\n";
      if (path.blocks[s - 1].skip_proj) {
        os << "  " << core_id(path.index, static_cast<int>(s) - 1) << " -> " << id
           << " [kind=\"skip\", style=dashed, color=red];\n";
      }
      os << "  " << id << " -> " << integrate_id(static_cast<int>(s)) << " [kind=\"integrate\"];\n";
    }
  }
  if (model.bfm()) {
    for (int s = N - 1; s >= 1; --s) {
      const std::string from = s == N - 1 ? integrate_id(N) : bfm_id(s + 1);
      os << "  " << from << " -> " << bfm_id(s) << " [kind=\"bottom_up\"];\n";
      os << "  " << integrate_id(s) << " -> " << bfm_id(s) << " [kind=\"lateral\"];\n";
    }
  }
  os << "}\n";
  return os.str();
}

template std::string export_topology<float>(const PrbFpnModel<float>&);
template std::string export_topology<double>(const PrbFpnModel<double>&);

}  // namespace prbfpn
