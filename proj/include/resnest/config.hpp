#ifndef RESNEST_CONFIG_HPP
#define RESNEST_CONFIG_HPP

#include "resnest/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace resnest {

/// Ordered key=value pairs. Grammar: one `key = value` per line, `#` starts a
/// comment, blank lines ignored, whitespace around keys and values trimmed.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
KeyValues read_key_value_file(const std::string& path);

bool parse_bool(const std::string& key, const std::string& value);
long long parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
std::vector<Index> parse_index_list(const std::string& key, const std::string& value);

}  // namespace resnest

#endif  // RESNEST_CONFIG_HPP
