#include "autorubric/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "autorubric/error.hpp"

namespace autorubric {

std::string trim(std::string_view text) {
    std::size_t begin = 0, end = text.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    return std::string(text.substr(begin, end - begin));
}

std::string to_lower(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tpl.size());
    std::size_t pos = 0;
    while (pos < tpl.size()) {
        const auto open = tpl.find('{', pos);
        if (open == std::string_view::npos) break;
        const auto close = tpl.find('}', open + 1);
        if (close == std::string_view::npos) break;
        out.append(tpl.substr(pos, open - pos));
        const std::string key(tpl.substr(open + 1, close - open - 1));
        auto it = values.find(key);
        if (it != values.end()) {
            out += it->second;
            pos = close + 1;
        } else {
            out.push_back('{');
            pos = open + 1;
        }
    }
    out.append(tpl.substr(pos));
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::io_error, "cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw Error(ErrorCode::io_error, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<nlohmann::json> read_ndjson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (trim(line).empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::invalid_argument,
                        path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

} // namespace autorubric
