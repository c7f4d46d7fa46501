#include "astrosnn/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "astrosnn/errors.hpp"

namespace fs = std::filesystem;

namespace astrosnn {

std::string read_corpus_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string data = ss.str();
    if (data.empty()) throw DataError("corpus file is empty: " + path);
    return data;
}

std::vector<int32_t> bytes_to_tokens(const std::string& bytes) {
    std::vector<int32_t> out;
    out.reserve(bytes.size());
    for (char c : bytes) out.push_back(static_cast<int32_t>(static_cast<unsigned char>(c)));
    return out;
}

std::vector<int32_t> load_corpus(const std::string& path) {
    return bytes_to_tokens(read_corpus_file(path));
}

std::string assemble_doc_corpus(const std::string& root, int64_t cap_bytes) {
    if (cap_bytes < 1) throw ParameterError("corpus cap must be positive");
    std::error_code ec;
    if (!fs::is_directory(root, ec))
        throw DataError("corpus root is not a directory: " + root);

    std::vector<std::string> paths;
    for (fs::recursive_directory_iterator it(root, fs::directory_options::skip_permission_denied,
                                             ec),
         end;
         it != end; it.increment(ec)) {
        if (ec) break;
        if (it->is_regular_file(ec) && it->path().filename() == "copyright")
            paths.push_back(it->path().string());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw DataError("no license texts found under " + root);

    std::string out;
    out.reserve(static_cast<size_t>(cap_bytes));
    for (const std::string& p : paths) {
        std::ifstream f(p, std::ios::binary);
        if (!f) continue;  // vanished or unreadable: skip, ordering stays deterministic
        std::ostringstream ss;
        ss << f.rdbuf();
        out += ss.str();
        out += '\n';
        if (static_cast<int64_t>(out.size()) >= cap_bytes) {
            out.resize(static_cast<size_t>(cap_bytes));
            break;
        }
    }
    if (out.empty()) throw DataError("license texts under " + root + " are all unreadable");
    return out;
}

CorpusSplit split_corpus(const std::vector<int32_t>& tokens, double heldout_frac) {
    if (!(heldout_frac > 0 && heldout_frac < 1))
        throw ParameterError("heldout fraction must lie in (0,1)");
    if (tokens.size() < 4) throw DataError("corpus too small to split");
    auto cut = static_cast<size_t>(static_cast<double>(tokens.size()) * (1.0 - heldout_frac));
    cut = std::min(std::max<size_t>(cut, 2), tokens.size() - 2);
    CorpusSplit s;
    s.train.assign(tokens.begin(), tokens.begin() + static_cast<int64_t>(cut));
    s.heldout.assign(tokens.begin() + static_cast<int64_t>(cut), tokens.end());
    return s;
}

}  // namespace astrosnn
