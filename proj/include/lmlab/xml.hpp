#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lmlab::xml {

// Small DOM for well-formed XML: elements, text, attributes. Handles
// declarations, comments, CDATA, DOCTYPE, numeric and named entities.
// Namespace prefixes are kept verbatim; match on local_name().
struct Node {
    enum class Kind { Element, Text };
    Kind kind = Kind::Element;
    std::string name;  // element name as written, possibly prefixed
    std::string text;  // content for Text nodes
    std::vector<std::pair<std::string, std::string>> attributes;
    std::vector<Node> children;

    std::string_view local_name() const;
    const std::string* attribute(std::string_view attr_name) const;
};

// Returns the document element. Throws std::runtime_error with a line
// number on malformed input.
Node parse(std::string_view text);

}  // namespace lmlab::xml
