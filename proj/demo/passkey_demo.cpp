// Runs one passkey instance through chunked prefill with eviction and
// prints the key, the model's answer and the KV footprint.

#include <iostream>

#include <CLI11.hpp>

#include "kvlab/kvlab.hpp"

int main(int argc, char** argv) {
  CLI::App app{"passkey demo"};
  std::string model_path;
  std::size_t seq_len = 512, chunk = 64, seed = 0;
  double retention = 0.5, depth = 0.5;
  bool patched = false;
  std::string method = "snap";
  app.add_option("--model", model_path, "checkpoint (random init when omitted)");
  app.add_option("--seq-len", seq_len);
  app.add_option("--chunk", chunk);
  app.add_option("--retention", retention);
  app.add_option("--method", method, "none|snap|pyramid|l2key");
  app.add_option("--depth", depth);
  app.add_flag("--patched", patched, "score chunks with the prompt's last queries");
  app.add_option("--seed", seed);
  CLI11_PARSE(app, argc, argv);

  try {
    kvlab::Model model = model_path.empty() ? kvlab::make_model(kvlab::ModelConfig{}, seed) : kvlab::load_model(model_path);
    kvlab::Vocabulary vocab;
    vocab.size = model.config.vocab_size;
    kvlab::PasskeyOptions po;
    po.seq_len = seq_len;
    po.depth = depth;
    auto rng = kvlab::make_rng(seed, 1);
    const kvlab::TaskInstance task = kvlab::gen_passkey(po, vocab, rng);

    kvlab::PrefillOptions opt;
    opt.chunk_size = chunk;
    opt.policy.method = kvlab::parse_method(method);
    opt.policy.retention = retention;
  opt.policy.patched = patched;
    opt.modes = kvlab::HeadModes::all(model.config, kvlab::HeadKind::Full);
    const kvlab::InstanceResult r = kvlab::run_instance(model, task, "passkey", opt);

    kvlab::Session s = kvlab::chunked_prefill(model, task.tokens, opt);
    const kvlab::Tokens out = kvlab::decode_greedy(model, s.state, opt.modes, opt.streaming, {}, task.answer.size());
    std::cout << "key:      ";
    for (auto t : task.answer) std::cout << ' ' << t;
    std::cout << "\nanswer:   ";
    for (auto t : out) std::cout << ' ' << t;
    std::cout << "\nscore:     " << r.score << "\nfootprint: " << r.report.footprint << "\npeak:      " << r.report.peak_kv
              << '\n';
  } catch (const std::exception& e) {
    std::cerr << "passkey_demo: " << e.what() << '\n';
    return 1;
  }
}
