// Writes the bundled toy fixtures under data/toy (or the directory given).
#include <filesystem>
#include <iostream>
#include <string>

#include "defgen/corpus.hpp"
#include "defgen/io.hpp"
#include "defgen/synth.hpp"

using namespace defgen;

int main(int argc, char** argv) {
  const std::filesystem::path dir = argc > 1 ? argv[1] : std::filesystem::path(DEFGEN_DATA_DIR) / "toy";
  std::filesystem::create_directories(dir);

  store_entries(dir / "entries.jsonl", synth_entries({240, 2, SynthLanguage::A, 2}));
  store_entries(dir / "entries_b.jsonl", synth_entries({24, 3, SynthLanguage::B, 1}));

  // Two slot words are left out so the filter has something to drop.
  std::string allow = "# defining vocabulary for the toy dictionary\n";
  for (const std::string& w : synth_defining_words()) {
    if (w != "huge" && w != "carefully") allow += w + "\n";
  }
  io::write_file_atomic(dir / "defining_words.txt", allow);

  io::write_file_atomic(dir / "smoke.cfg",
                        "# small end-to-end run: a 2-layer decoder so both stages finish in seconds\n"
                        "profile = toy\n"
                        "dec_layers = 2\n"
                        "max_steps = 200\n"
                        "eval_every = 100\n"
                        "stage1_lr = 3e-3\n"
                        "stage1_warmup = 50\n"
                        "stage2_lr = 1e-4\n"
                        "stage2_warmup = 50\n"
                        "batch_size = 16\n"
                        "beam_size = 3\n"
                        "max_len = 24\n"
                        "seed = 1\n");
  std::cout << "wrote toy fixtures to " << dir << '\n';
  return 0;
}
