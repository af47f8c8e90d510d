// Searches adaptor configurations for trainable-parameter counts close to a
// target, with ViT-B / BERT-base sized inputs (768-d) by default.
//
//   param_search [target=12200000] [d_img=768] [d_txt=768] [top=10]

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "adaptor/adaptor_net.hpp"

int main(int argc, char** argv) {
  const double target = argc > 1 ? std::atof(argv[1]) : 12.2e6;
  const std::size_t d_img = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 768;
  const std::size_t d_txt = argc > 3 ? std::strtoul(argv[3], nullptr, 10) : 768;
  const std::size_t top = argc > 4 ? std::strtoul(argv[4], nullptr, 10) : 10;

  struct Row {
    adaptor::AdaptorConfig config;
    std::size_t count;
  };
  std::vector<Row> rows;
  for (bool shared : {true, false}) {
    for (std::size_t ds = 64; ds <= 1024; ds += 64) {
      for (std::size_t mult : {1, 2, 4}) {
        adaptor::AdaptorConfig c;
        c.d_img = d_img;
        c.d_txt = d_txt;
        c.d_shared = ds;
        c.d_ffn = mult * ds;
        c.n_layers = 2;
        c.n_heads = 8;
        c.share_branch_weights = shared;
        rows.push_back({c, adaptor::param_count(c)});
      }
    }
  }
  auto err = [&](const Row& r) { return std::abs(static_cast<double>(r.count) - target); };
  std::sort(rows.begin(), rows.end(), [&](const Row& a, const Row& b) { return err(a) < err(b); });

  std::printf("target %.0f, d_img %zu, d_txt %zu, n_layers 2\n\n", target, d_img, d_txt);
  std::printf("| d_shared | d_ffn | shared | params | rel. error |\n");
  std::printf("|---:|---:|:---:|---:|---:|\n");
  for (std::size_t i = 0; i < std::min(top, rows.size()); ++i) {
    const auto& r = rows[i];
    std::printf("| %zu | %zu | %s | %zu | %+.2f%% |\n", r.config.d_shared, r.config.d_ffn,
                r.config.share_branch_weights ? "yes" : "no", r.count,
                100.0 * (static_cast<double>(r.count) - target) / target);
  }
  return 0;
}
