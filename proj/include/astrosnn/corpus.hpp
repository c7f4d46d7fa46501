#pragma once

// Byte-level corpus loading and the built-in desk-scale corpus assembled from
// the machine's own package license texts.

#include <cstdint>
#include <string>
#include <vector>

namespace astrosnn {

// Whole file as raw bytes. Throws DataError when missing or empty.
std::string read_corpus_file(const std::string& path);

// Raw bytes to byte-level token ids (0..255).
std::vector<int32_t> bytes_to_tokens(const std::string& bytes);

std::vector<int32_t> load_corpus(const std::string& path);

// Deterministic ~1 MB English text with no licensing strings attached to this
// project: the copyright/license files Debian ships under /usr/share/doc,
// concatenated in sorted path order up to cap_bytes. The same machine always
// yields the same corpus; different machines differ, which is fine for a
// throughput- and sanity-scale corpus.
std::string assemble_doc_corpus(const std::string& root = "/usr/share/doc",
                                int64_t cap_bytes = 1200000);

// Leading (1 - heldout_frac) for training, trailing fraction for evaluation.
// The split point is deterministic in the corpus length.
struct CorpusSplit {
    std::vector<int32_t> train;
    std::vector<int32_t> heldout;
};
CorpusSplit split_corpus(const std::vector<int32_t>& tokens, double heldout_frac);

}  // namespace astrosnn
